import matplotlib

# Figures are only written to files
matplotlib.use("Agg")
