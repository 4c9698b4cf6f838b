# Utility modules for file handling and validation 