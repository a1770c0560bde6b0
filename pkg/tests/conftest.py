import hypothesis

hypothesis.settings.register_profile(
    "fast", max_examples=10, deadline=None, derandomize=True
)
hypothesis.settings.register_profile(
    "thorough", max_examples=100, deadline=None
)
hypothesis.settings.load_profile("fast")
