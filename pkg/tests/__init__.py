# Tests for particle-mfg
