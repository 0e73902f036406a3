from setuptools import setup, find_packages

authors = [
    "SmartFlow Lab contributors",
]

with open("requirements.txt", "r", encoding="utf-8") as req_f:
    install_requires = [line.strip() for line in req_f if line.strip()]

with open("requirements-dev.txt", "r", encoding="utf-8") as req_f:
    dev_requires = [line.strip() for line in req_f if line.strip()]

setup(
    name="smartflow-lab",
    author=", ".join(authors),
    version="0.1.0",
    packages=find_packages(exclude=["tests", "tests.*"]),
    include_package_data=True,
    install_requires=install_requires,
    extras_require={"dev": dev_requires},
    python_requires=">=3.8",
    entry_points={
        "console_scripts": [
            "smartflow=smartflow.cli:main",
        ],
    },
)
