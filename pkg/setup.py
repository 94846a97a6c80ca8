from setuptools import setup, find_packages

setup(
    name="overlap-track",
    version="0.1.0",
    package_dir={"": "src", "config": "config"},
    packages=find_packages(where="src") + ["config"],
    py_modules=["main"],
    install_requires=[
        "pydantic",
        "pydantic-settings",
        "python-dotenv",
        "torch",
        "torchvision",
        "numpy",
        "pillow",
        "loguru",
        "tenacity",
        "pytest",
    ],
    entry_points={
        "console_scripts": [
            "overlap-track=main:main",
        ],
    },
    python_requires=">=3.9",
)
