"""Learning and verifying neural contraction metrics."""
