from setuptools import setup

with open("requirements.txt") as f:
    required = f.read().splitlines()

setup(
    name="mpbm",
    version="1.0",
    description="Model-aware parametric batch-wise mixup for domain generalization",
    license="Apache 2.0",
    packages=["mpbm"],
    install_requires=required,
    entry_points={"console_scripts": ["mpbm=mpbm.cli:main"]},
)
