"""Greedy filter pruning by classification accuracy reduction, plus weight compression."""
