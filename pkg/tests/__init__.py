"""Test suite for gradshield"""
