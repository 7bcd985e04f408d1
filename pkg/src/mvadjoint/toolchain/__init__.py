"""Command-line orchestration, campaigns, reports and cost accounting."""
