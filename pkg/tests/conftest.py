from hypothesis import settings

# Reproducible property tests: the suite's determinism guarantees extend to
# its own randomness.
settings.register_profile("deterministic", derandomize=True, max_examples=80)
settings.load_profile("deterministic")
