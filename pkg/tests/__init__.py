"""Tests for zxvad"""
