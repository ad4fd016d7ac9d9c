"""Temperature-annealed few-step sampling with step-aware GRPO for 2-D flow models."""

from .autodiff import AdamState, ParamStore, Tensor, adam_step, backward, finite_diff_check
from .checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config, parse_config
from .flow import VelocityField, cfm_loss, euler_ode_sample, pretrain, sde_sample
from .grpo import GrpoConfig, Trainer, clipped_term, integrate_advantages, policy_objective, train, train_iteration
from .metrics import correlate_step_rewards, pearson, sliced_wasserstein, step_sweep
from .rewards import MixtureTarget, RingTarget, composite_reward, evaluate_group, mode_reward, quadrant_reward
from .sampler import AnnealSchedule, PolicyHead, recompute_logprobs, rollout, rollout_batch

__version__ = "0.1.0"
