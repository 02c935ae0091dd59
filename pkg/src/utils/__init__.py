# Utilitaires partagés : journalisation, nettoyage des chemins, graines.
