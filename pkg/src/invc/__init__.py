"""One-shot voice conversion with instance-normalization-based
speaker/content disentanglement."""

from .corpus import FeatureCache, Manifest, NormStats, build_manifest, compute_norm_stats, preprocess_corpus
from .dsp import DspConfig, MelFilterbank, build_mel_filterbank, griffin_lim, linear_to_mel, mel_to_linear_approx, stft_magnitude
from .errors import CheckpointError, ConfigError, IngestionError, InvcError, NumericError, SizeError
from .model import ArchConfig, CheckpointBundle, VoiceConverter, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, adam_step, kl_loss, reconstruction_loss, sample_segment, total_loss, train
from .conversion import ConversionRequest, convert, convert_mel
from .evaluation import AblationSetting, ProbeConfig, global_variance, run_ablation, speaker_embedding_eval, train_probe

__version__ = "0.1.0"
