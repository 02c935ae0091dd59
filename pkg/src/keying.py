"""
Génération, encodage, perturbation et sérialisation des clés utilisateur.

Une clé est une suite de bits de longueur L. Elle est encodée en vecteur réel
±1 (bit 1 -> +1, bit 0 -> -1) avant d'être concaténée aux vecteurs latents ou
aux caractéristiques d'identité.
"""

import secrets
import uuid
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import torch

from errors import InvalidArgumentError

DEFAULT_KEY_LENGTHS = (8, 128, 256)


@dataclass(frozen=True)
class UserKey:
    """Clé utilisateur : bits ordonnés (bits[0] = bit de poids fort) et identifiant d'audit"""
    bits: Tuple[int, ...]
    id: str = field(default='', compare=False)

    def __post_init__(self):
        if len(self.bits) < 1:
            raise InvalidArgumentError("Une clé doit contenir au moins un bit", field='bits')
        if any(b not in (0, 1) for b in self.bits):
            raise InvalidArgumentError("Les bits d'une clé valent 0 ou 1", field='bits')

    @property
    def length(self) -> int:
        return len(self.bits)

    def to_int(self) -> int:
        value = 0
        for bit in self.bits:
            value = (value << 1) | bit
        return value

    def to_hex(self) -> str:
        """Représentation "0x..." sur ceil(L/4) chiffres hexadécimaux"""
        digits = (self.length + 3) // 4
        return f"0x{self.to_int():0{digits}x}"

    def serialize(self) -> str:
        """Format "<L>:0x<hex>" (la longueur explicite lève l'ambiguïté des zéros de tête)"""
        return f"{self.length}:{self.to_hex()}"

    def __repr__(self) -> str:
        # Jamais les bits dans les logs
        return f"UserKey(id={self.id!r}, length={self.length})"


@dataclass(frozen=True)
class KeyVector:
    """Encodage ±1 d'une clé"""
    values: torch.Tensor

    @property
    def length(self) -> int:
        return int(self.values.shape[0])


def keygen(length: int, rng_seed: Optional[int] = None) -> UserKey:
    """
    Génère une clé de `length` bits uniformes.

    Args:
        length: Nombre de bits (>= 1)
        rng_seed: Graine optionnelle (entier >= 0) ; sans graine, le générateur `secrets` est utilisé

    Returns:
        Clé utilisateur
    """
    if not isinstance(length, (int, np.integer)) or isinstance(length, bool) or length < 1:
        raise InvalidArgumentError(f"Longueur de clé invalide: {length}", field='length')
    length = int(length)
    if rng_seed is not None and (isinstance(rng_seed, bool) or not isinstance(rng_seed, (int, np.integer))
                                 or rng_seed < 0):
        raise InvalidArgumentError(f"Graine invalide: {rng_seed}", field='rng_seed')

    if rng_seed is None:
        value = secrets.randbits(length)
        bits = tuple((value >> (length - 1 - i)) & 1 for i in range(length))
        return UserKey(bits=bits, id=f"key-{uuid.uuid4().hex[:12]}")

    rng = np.random.default_rng(rng_seed)
    bits = tuple(int(b) for b in rng.integers(0, 2, size=length))
    key_id = f"key-{int(rng.integers(0, 2 ** 48)):012x}"
    return UserKey(bits=bits, id=key_id)


def encode_key(key: UserKey, dtype: torch.dtype = torch.float32) -> KeyVector:
    """Encode une clé en vecteur ±1"""
    values = torch.tensor(key.bits, dtype=dtype) * 2 - 1
    return KeyVector(values=values)


def decode_key_vector(vector: KeyVector, key_id: str = '') -> UserKey:
    """Inverse de `encode_key`"""
    values = vector.values.detach().cpu().tolist()
    if any(v not in (-1.0, 1.0) for v in values):
        raise InvalidArgumentError("Un vecteur de clé ne contient que des ±1", field='values')
    return UserKey(bits=tuple(1 if v > 0 else 0 for v in values), id=key_id)


def stack_keys(keys: Sequence[UserKey], dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Empile des clés de même longueur en un tenseur (B, L) de ±1"""
    if not keys:
        raise InvalidArgumentError("Aucune clé à empiler", field='keys')
    lengths = {k.length for k in keys}
    if len(lengths) != 1:
        raise InvalidArgumentError(f"Longueurs de clé hétérogènes: {sorted(lengths)}", field='keys')
    return torch.stack([encode_key(k, dtype).values for k in keys])


def hamming_distance(a: UserKey, b: UserKey) -> int:
    if a.length != b.length:
        raise InvalidArgumentError("Distance de Hamming entre clés de longueurs différentes")
    return sum(x != y for x, y in zip(a.bits, b.bits))


def inject_key_errors(key: UserKey, n_bits: int, rng_seed: int) -> UserKey:
    """
    Inverse exactement `n_bits` bits choisis uniformément sans remise.

    Args:
        key: Clé d'origine
        n_bits: Nombre de bits erronés (0 <= n_bits <= L)
        rng_seed: Graine du tirage des positions

    Returns:
        Clé à distance de Hamming `n_bits` de `key`
    """
    if n_bits < 0 or n_bits > key.length:
        raise InvalidArgumentError(
            f"{n_bits} bits erronés impossibles pour une clé de {key.length} bits",
            field='n_bits')
    if n_bits == 0:
        return key

    rng = np.random.default_rng(rng_seed)
    positions = set(int(p) for p in rng.choice(key.length, size=n_bits, replace=False))
    bits = tuple(1 - b if i in positions else b for i, b in enumerate(key.bits))
    return UserKey(bits=bits, id=f"{key.id}~{n_bits}")


def deserialize_key(text: str, key_id: Optional[str] = None) -> UserKey:
    """
    Lit une clé "<L>:0x<hex>" ou "0x<hex>" (L vaut alors 4 x nombre de chiffres).

    Raises:
        InvalidArgumentError: format invalide ou valeur hors de L bits
    """
    text = (text or '').strip()
    if ':' in text:
        length_str, hex_str = text.split(':', 1)
        try:
            length = int(length_str)
        except ValueError:
            raise InvalidArgumentError(f"Longueur de clé illisible: {length_str!r}", field='key')
    else:
        hex_str = text
        length = None

    if not hex_str.lower().startswith('0x'):
        raise InvalidArgumentError("Une clé sérialisée commence par 0x", field='key')
    digits = hex_str[2:]
    try:
        value = int(digits, 16)
    except ValueError:
        raise InvalidArgumentError(f"Chiffres hexadécimaux invalides: {digits!r}", field='key')
    if length is None:
        length = 4 * len(digits)
    if length < 1 or value >= (1 << length):
        raise InvalidArgumentError(f"Valeur hors d'une clé de {length} bits", field='key')

    bits = tuple((value >> (length - 1 - i)) & 1 for i in range(length))
    return UserKey(bits=bits, id=key_id or f"key-{uuid.uuid4().hex[:12]}")


def sample_key_vectors(n: int, length: int, generator: torch.Generator,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Tire `n` clés ±1 de longueur `length` (entraînement, sans objets UserKey)"""
    bits = torch.randint(0, 2, (n, length), generator=generator)
    return bits.to(dtype) * 2 - 1


def sample_distinct_key_vectors(reference: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Tire des clés ±1 différentes ligne à ligne de `reference`"""
    n, length = reference.shape
    other = sample_key_vectors(n, length, generator, reference.dtype)
    same = (other == reference).all(dim=1)
    if same.any():
        flip = torch.randint(0, length, (n,), generator=generator)
        rows = torch.nonzero(same).flatten()
        other[rows, flip[rows]] = -other[rows, flip[rows]]
    return other
