from smartflow.mocks.synthetic import random_registry, tidal_network, write_tidal_network, write_trip_corpus

__all__ = ["random_registry", "tidal_network", "write_tidal_network", "write_trip_corpus"]
