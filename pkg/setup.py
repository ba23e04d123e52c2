# setup.py
from setuptools import setup, find_packages

setup(
    name="scope-agent",
    version="0.1.0",
    packages=find_packages(include=["scopeagent", "scopeagent.*", "scopeagent_cli"]),
    package_data={"scopeagent.config": ["*.json"]},
    install_requires=[
        "numpy>=1.26.4",
        "scipy>=1.11.0",
        "scikit-image>=0.21.0",
        "Pillow>=10.0.0",
        "openai>=1.2.4",
        "httpx>=0.24.0",
        "python-dotenv>=1.0.0",
        "tqdm>=4.66.1",
    ],
    extras_require={
        "dev": ["pytest>=7.4.3", "black>=23.11.0"],
    },
    entry_points={
        'console_scripts': [
            'scopeagent=scopeagent_cli:main',
        ],
    },
)
