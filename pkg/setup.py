from setuptools import setup

setup(
    name="artigauss",
    version="0.1.0",
    description="Articulated object reconstruction from two-state 3D Gaussian observations",
    install_requires=[
        "numpy",
        "scipy",
        "tensorflow>=2.11,<2.16",
        "gin-config>=0.5",
        "Pillow",
        "h5py",
        "tqdm",
        "plyfile",
    ],
    entry_points={
        "console_scripts": [
            "artigauss = artigauss.cli:main",
        ]
    },
    packages=["artigauss"],
    package_data={"artigauss": [
        "configs/*.gin",
        "configs/objects/*.json"
    ]},
    zip_safe=False
)
