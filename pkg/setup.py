from setuptools import setup, find_packages

setup(
    author='Ian Selby',
    author_email='ias49@cam.ac.uk',
    description='Multi-scale wavelet normalizing flows for image density estimation, super-resolution and sampling',
    name='wavelet_flow',
    use_scm_version=True,
    setup_requires=["setuptools_scm>=7.0.4"],
    packages=find_packages(exclude=('tests',)),
    include_package_data=True,
    package_data={'wavelet_flow': ['config.yml']},
    entry_points={
        'console_scripts': [
            'wavelet_flow=wavelet_flow.main:main',
        ]
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires=">=3.8",
    install_requires=[
        "numpy>=1.24.2",
        "scipy>=1.10.0",
        "PyYAML>=6.0",
        "pandas>=1.3.3",
        "setuptools>=42.0.0",
    ],
    extras_require={
        'test': ["pytest>=7.0"],
    },
)
