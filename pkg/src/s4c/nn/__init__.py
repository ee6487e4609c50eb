"""Minimal 3D convolutional network with hand-written backward passes."""
