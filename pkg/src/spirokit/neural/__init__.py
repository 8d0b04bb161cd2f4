from .embedding import text_embed
from .encoder import (EncoderConfig, EncoderOutput, EncoderParams,
                      classifier_loss_and_grads, encoder_forward)
from .kernels import active_backend, get_kernels
from .projector import (ProjectorParams, alignment_loss_and_grads,
                        projector_forward)
from .training import (TrainConfig, pretrain_projector, schedule_lr,
                       train_classifier)

__all__ = [
    "EncoderConfig", "EncoderOutput", "EncoderParams", "ProjectorParams",
    "TrainConfig", "active_backend", "alignment_loss_and_grads",
    "classifier_loss_and_grads", "encoder_forward", "get_kernels",
    "pretrain_projector", "projector_forward", "schedule_lr",
    "text_embed", "train_classifier",
]
