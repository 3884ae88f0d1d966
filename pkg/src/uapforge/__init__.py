"""Universal adversarial perturbations and trigger words against dual-encoder retrieval models."""

from .adapters import EncoderBundle, ToyDualEncoder, load_adapter
from .augment import ScMixParams, scmix, scmix_pair
from .config import RunConfig
from .dataset import PairedDataset, load_manifest, synth_toy_dataset
from .evaluation import AttackReport, attack_success_rate, evaluate_attack, resize_uap, retrieval_recall
from .objectives import LossConfig, loss_global, loss_local, loss_total
from .optimizer import AttackConfig, AugmentConfig, ImageUAP, run_image_attack
from .persistence import load_triggers, load_uap, save_triggers, save_uap
from .text_attack import TextConfig, TextTrigger, TriggerLexicon, apply_trigger, mine_triggers

__version__ = "0.1.0"
