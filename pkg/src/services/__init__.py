# Simulator services
