"""
Dérivation des graines : toute l'aléa d'une exécution vient d'une graine racine,
découpée en flux nommés (dataset, init, training, simulation, keys).
"""

import hashlib
import random

import numpy as np
import torch


STREAMS = ('dataset', 'init', 'training', 'simulation', 'keys')


def derive_seed(root_seed: int, stream: str) -> int:
    """Graine 63 bits stable pour le flux `stream` de la graine racine"""
    digest = hashlib.sha256(f"{int(root_seed)}:{stream}".encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') & ((1 << 63) - 1)


def torch_generator(seed: int) -> torch.Generator:
    """Générateur torch CPU initialisé avec `seed`"""
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def seed_everything(seed: int):
    """Fixe les graines globales (initialisation des poids torch notamment)"""
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
