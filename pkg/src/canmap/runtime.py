import logging
import random

import numpy as np
import torch

logger = logging.getLogger(__name__)


def configure(seed: int | None = None, deterministic: bool = False, threads: int | None = None):
    """Seed every RNG in play and optionally pin torch to reproducible kernels."""
    if threads is not None:
        torch.set_num_threads(int(threads))
    if deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    if seed is not None:
        random.seed(seed)
        np.random.seed(seed % 2 ** 32)
        torch.manual_seed(seed)
    logger.debug("runtime: seed=%s deterministic=%s threads=%s", seed, deterministic, torch.get_num_threads())
