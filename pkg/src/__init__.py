"""register-adapt source package."""
