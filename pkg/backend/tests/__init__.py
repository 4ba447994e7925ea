# Test package for the mapping engine components