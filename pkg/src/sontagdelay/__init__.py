"""Sontag-type stabilizers for control-affine retarded systems."""
