"""Command handlers for the register-adapt CLI."""
