from .arch import (ArchitectureSpec, DctEmbeddingNet, MLPHead, ResNet18Rgb, build_embedding,
                   forward_backward, gaze_estimator, projection_head)
from .checkpoint import CheckpointVersionError, load_checkpoint, save_checkpoint
from .layers import (BatchNorm, Conv2D, Dense, GlobalAvgPool, MaxPool2D, Module, ReLU,
                     ResidualBlock, Sequential)
from .optim import Adam
