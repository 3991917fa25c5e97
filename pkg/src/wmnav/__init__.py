"""World-model and model-free agents for 2D LIDAR mapless navigation."""

__version__ = "0.1.0"
