"""
Exceptions communes du framework KFAAR.

Chaque module lève l'une de ces classes (ou une sous-classe locale) afin que la
ligne de commande puisse afficher l'étape et le champ fautifs.
"""

from typing import Optional


class KFAARError(Exception):
    """Erreur de base du framework"""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


class InvalidArgumentError(KFAARError, ValueError):
    """Argument invalide (dimension, longueur de clé, paire dégénérée...)"""
    pass


class InvalidStateError(KFAARError, RuntimeError):
    """Opération impossible dans l'état courant (checkpoint absent, modèle non entraîné)"""
    pass


class NotFoundError(KFAARError, FileNotFoundError):
    """Fichier ou ressource introuvable"""
    pass
