"""RolLE MKII software stack: teleop collection, CNN training, autonomous driving."""

__version__ = "0.1.0"
