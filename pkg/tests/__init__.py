"""
Test package for the data ownership ledger.

This package contains unit, integration, functional and load tests.
"""
