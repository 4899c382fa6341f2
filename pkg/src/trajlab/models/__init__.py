"""Trajectory models and the shared sampling machinery."""
from .env import LinkEnv, CellEnv, make_env, encode, InvalidTrajectory
from .transition import TransitionMatrix, fit_transition
from .sampling import (rollout, rollout_sample, draw_actions, SamplingError, complete_prefixes,
                       step_probabilities, run_batch)
from .policy import (SequencePolicy, RecurrentHead, AttentionConfig, TrainingDivergence,
                     rnn_train, arnn_train, fit_sequence, sequence_cross_entropy)
from .maxent import MaxEntModel, maxent_train, empirical_features
from .gail import (GailConfig, TrajGailBundle, Batch, make_batch, gail_train,
                   gail_discriminator_update, gail_value_update, gail_policy_update,
                   discriminator_loss, value_loss, value_targets, policy_objective, reward_from_discriminator,
                   LOG_FIELDS)
from .io import save_model, load_model, manifest, ModelFileError
