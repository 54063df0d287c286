from setuptools import setup, find_packages

setup(
    name="oceanfuse",
    version="0.1.0",
    packages=find_packages(exclude=["examples", "examples.*"]),
    install_requires=[
        "numpy>=1.26.0",
        "scipy>=1.11.0",
        "pandas>=2.1.1",
        "scikit-learn>=1.3.0",
        "joblib>=1.3.2",
        "pydantic>=2.10.4",
        "pydantic-settings>=2.7.1",
        "python-dotenv>=1.0.0",
        "prometheus-client>=0.16.0",
        "python-json-logger>=3.1.0",
    ],
    extras_require={
        "test": ["pytest>=7.3.1"],
    },
    entry_points={
        "console_scripts": ["oceanfuse=oceanfuse.run:main"],
    },
    python_requires=">=3.10",
)
