"""Benchmark harness: simulators, baseline synthesizers, metrics and leaderboard."""
