from .aware import AttackerAwareHooks, AwareTrainConfig, attacker_aware_step
from .distcorr import DistCorrHooks, dcor_and_grad, distance_correlation
from .perturb import PerturbConfig, adversarial_noise, make_perturbation, perturb_activation, top_k_prune
from .transfer import (STRATEGIES, TRANSFER_CLIENT_LR, TRANSFER_OTHER_LR, PretrainResult, attacker_aware_pretrain, model_from_checkpoint,
                       resistance_transfer)

__all__ = [
    "AttackerAwareHooks", "AwareTrainConfig", "attacker_aware_step", "DistCorrHooks", "dcor_and_grad",
    "distance_correlation", "PerturbConfig", "adversarial_noise", "make_perturbation", "perturb_activation",
    "top_k_prune", "STRATEGIES", "TRANSFER_CLIENT_LR", "TRANSFER_OTHER_LR", "PretrainResult", "attacker_aware_pretrain", "model_from_checkpoint",
    "resistance_transfer",
]
