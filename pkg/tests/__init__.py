"""Test package for register-adapt."""
