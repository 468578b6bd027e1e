"""
GA-DAN command-line entry point
Usage: python main.py <train|adapt|adapt-multi|check-grads|invariants|toy-domains> [options]
"""

from dotenv import load_dotenv

from gadan.cli import main

# Load environment variables (GADAN_LOG_LEVEL, GADAN_DEVICE, ...)
load_dotenv()


if __name__ == "__main__":
    main()
