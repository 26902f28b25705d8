"""
Configuration for process-level settings.
"""
import os

import dotenv

dotenv.load_dotenv()

LOG_DIR = os.getenv("REN_LOG_DIR", os.path.abspath(os.path.join(os.path.dirname(__file__), "../log")))
LOG_LEVEL = os.getenv("REN_LOG_LEVEL", "INFO").upper()
OUTPUT_DIR = os.getenv("REN_OUTPUT_DIR", os.path.abspath(os.path.join(os.path.dirname(__file__), "../runs")))
