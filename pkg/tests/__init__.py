# ecoroute tests
