"""Joint trajectory/action generative forecasting."""
