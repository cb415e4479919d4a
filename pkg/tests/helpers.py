from splicedet.config import smoke_config
from splicedet.dataset import make_synthetic_fixture

# the 5-image fixture the smoke profile is tuned to memorize
SMOKE_FIXTURE = dict(n_images=5, image_size=(128, 128), splice_range=(3, 4), radius_range=(14.0, 22.0), seed=0)


def tiny_config(**overrides):
    values = dict(IMAGE_SHAPE=(64, 64, 3), IMAGE_MAX_DIM=64, DEPTH_MULTIPLIER=0.25, FPN_CHANNELS=16,
                  RPN_CONV_CHANNELS=16, BOX_HEAD_DIM=32, MASK_HEAD_CHANNELS=8, PRE_NMS_LIMIT_TRAIN=200,
                  PRE_NMS_LIMIT_INFERENCE=200, POST_NMS_ROIS_TRAINING=32, POST_NMS_ROIS_INFERENCE=16,
                  TRAIN_ROIS_PER_IMAGE=16, RPN_TRAIN_ANCHORS_PER_IMAGE=32, STEPS_PER_EPOCH=3, EPOCHS=2,
                  LR_DROPS=((1, 0.003),), ACCUMULATE_STEPS=1, CHECKPOINT_EVERY_EPOCHS=1)
    values.update(overrides)
    return smoke_config(**values)


def tiny_samples(n=4, seed=0, size=64):
    return make_synthetic_fixture(n, (size, size), (3, 3), seed=seed)
