"""
Illusion Toolkit - adversarial illusions in multi-modal embeddings
"""
