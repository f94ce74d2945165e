# Core numerics and shared plumbing
