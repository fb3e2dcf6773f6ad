from setuptools import setup, find_packages

setup(
    name="BaryShield",
    version="1.0.0",
    packages=find_packages(exclude=["tests", "tests.*", "examples", "examples.*"]),
    install_requires=[
        'numpy>=1.21.0',
        'scipy>=1.7.0',
        'Pillow>=10.0.0',
    ],
    entry_points={
        'console_scripts': [
            'baryshield=baryshield.ui.cli:main',
        ],
    },
    description="Beckman min-flow barycenters on 2-D grids as a test-time adversarial defense",
    long_description=open('README.md').read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Development Status :: 4 - Beta",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.8",
)
