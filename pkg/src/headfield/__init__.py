"""Prior-guided dynamic implicit head reconstruction."""
