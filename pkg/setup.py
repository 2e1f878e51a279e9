from io import open
from os import path

# Always prefer setuptools over distutils
from setuptools import setup, find_packages

here = path.abspath(path.dirname(__file__))

# Get the long description from the README file
with open(path.join(here, 'README.md'), encoding='utf-8') as f:
    long_description = f.read()

setup(
    name='pdet',
    version='0.1.0',
    description='A desk-scale PDE transformer: spectral datasets, training, rollouts and nRMSE evaluation',
    long_description=long_description,
    long_description_content_type='text/markdown',
    author='The pdet developers',
    classifiers=[
        'Development Status :: 3 - Alpha',
        'Intended Audience :: Science/Research',
        'Topic :: Scientific/Engineering :: Artificial Intelligence',
        'Topic :: Scientific/Engineering :: Physics',
        'License :: OSI Approved :: MIT License',
        'Programming Language :: Python :: 3.8',
        'Programming Language :: Python :: 3.9',
        'Programming Language :: Python :: 3.10',
        'Programming Language :: Python :: 3.11',
    ],
    keywords='pde transformer surrogate spectral-solver flow-matching',
    package_dir={'': 'src'},
    packages=find_packages(where='src'),
    python_requires='>=3.8',
    install_requires=['torch>=2.1', 'numpy', 'einops', 'marshmallow>=3.13', 'recordclass', 'ujson'],
    extras_require={
        'dev': ['check-manifest'],
        'test': ['pytest', 'coverage'],
        'plot': ['matplotlib'],
    },
    entry_points={
        'console_scripts': ['pdet=pdet.cli:main'],
    },
)
