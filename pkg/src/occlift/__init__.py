"""Occlusion-robust 3D human pose lifting with a masked spatio-temporal graph refiner."""
__version__ = "0.1.0"
