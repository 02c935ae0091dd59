"""
Nettoyage et validation des entrées texte de la ligne de commande et des configurations.
"""

import os
import re
import unicodedata


# Caractères interdits dans les noms de fichiers (Windows inclus)
FORBIDDEN_CHARS = ['<', '>', ':', '"', '/', '\\', '|', '?', '*']


def sanitize_text(text: str, replacement: str = '_') -> str:
    """
    Nettoie le texte pour une utilisation sûre dans les noms d'artefacts.

    Args:
        text: Texte à nettoyer
        replacement: Caractère de remplacement pour les caractères interdits

    Returns:
        Texte nettoyé
    """
    if not text:
        return ''

    for char in FORBIDDEN_CHARS:
        text = text.replace(char, replacement)

    # Supprimer les caractères de contrôle
    text = ''.join(char for char in text if unicodedata.category(char) != 'Cc')
    text = re.sub(r'\s+', '_', text)
    return text.strip('._ ')


def sanitize_filename(filename: str, default: str = 'artefact', max_length: int = 120) -> str:
    """
    Nettoie un nom de fichier d'artefact (rapport, checkpoint, transcript).

    Args:
        filename: Nom de fichier à nettoyer
        default: Nom utilisé si le résultat est vide
        max_length: Longueur maximale du nom de fichier

    Returns:
        Nom de fichier nettoyé
    """
    if '.' in filename:
        name, ext = filename.rsplit('.', 1)
        ext = '.' + sanitize_text(ext)
    else:
        name, ext = filename, ''

    name = sanitize_text(name)[:max_length - len(ext)]
    if not name:
        name = default
    return name + ext


def validate_path(path: str) -> bool:
    """
    Vérifie qu'un chemin référencé par une configuration existe.

    Args:
        path: Chemin à vérifier

    Returns:
        True si le chemin existe
    """
    if not path:
        return False
    try:
        return os.path.exists(path)
    except (OSError, ValueError):
        return False
