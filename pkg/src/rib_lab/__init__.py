"""RIB Lab: позиционный bias RIB в потоковом оконном attention и микро-SR-трансформер."""

__version__ = "0.1.0"
