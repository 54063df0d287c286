# Make the services directory a Python package