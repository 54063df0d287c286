# Make the cli directory a Python package
