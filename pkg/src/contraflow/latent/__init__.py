from .flows import AffineCoupling, SplineCoupling, alternating_mask
from .geometry import (AmbientMetric, ambient_metric_at, decode_velocity, decoder_jacobian, jacobian_rank_ok,
                       metric_volume, pullback_metric, transition_to_manifold)
from .pipeline import PipelineResult, control_step, encode_dataset, latent_train_pipeline, pose_to_state
from .vae import (InjectiveFlowVae, VaeConfig, VaeTrainConfig, kl_standard_normal, pad,
                  reconstruction_mse, train_vae, unpad)
