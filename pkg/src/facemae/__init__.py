"""Masked reconstruction, relation matching and retrieval-based privacy audits at desk scale."""
