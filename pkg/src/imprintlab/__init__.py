"""imprintlab: a desk-scale lab for generator noise-imprint statistics,
imprint-fused data expansion, and hybrid-feature detection of generated
images."""

__version__ = "0.1.0"
