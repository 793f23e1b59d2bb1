"""Serial-chain model: kinematics, dynamics, payload mismatch."""
