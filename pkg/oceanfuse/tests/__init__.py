# Make the tests directory a Python package
