"""Speech enhancement with permutation-trained VAEs.

Two VAEs are pretrained on clean speech and on noise with a configurable
disentangling loss; a third encoder learns to produce both latent posteriors
from noisy speech and drives a real-valued STFT mask at inference time.
"""

__version__ = "0.1.0"

CHECKPOINT_FORMAT_VERSION = 1
