"""Core operations: encoding, field, occupancy, rendering, training and evaluation."""
