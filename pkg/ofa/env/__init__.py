"""Deterministic kinematic simulator: scenes, rendering, contact, scripted expert and rollouts."""
