"""Localize removed / added / changed / not-changed regions between two
registered photographs of one scene."""

__version__ = "0.1.0"
