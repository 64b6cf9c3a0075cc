# setup.py - Ion Lifetime Twin Setup Script
"""
Setup script for Ion Lifetime Twin.
Run this script once to prepare the working directory.

This script handles:
- Environment configuration
- Dependency check
- Run registry creation
- A short simulate-and-fit self-check
"""

import sys
from pathlib import Path

REQUIRED_PACKAGES = ['numpy', 'scipy', 'pandas', 'dotenv']

DEFAULT_ENV = """# Ion Lifetime Twin Configuration

# Application Settings
APP_NAME=Ion Lifetime Twin
APP_VERSION=1.0.0
DEBUG_MODE=false

# Storage
DATA_DIR=data
DATABASE_PATH=data/lifetime_runs.db
LOG_DIR=logs
LOG_LEVEL=INFO

# Execution
DEFAULT_WORKERS=1
CYCLES_PER_BLOCK=100000

# IRF self-measurement
IRF_MEASUREMENT_S=60
IRF_MEASUREMENT_PROMPT_PROB=0.0002

# Dark-count measurement
DARK_MEASUREMENT_S=60

# Start-time scan
SCAN_STEP_NS=0.2
SCAN_MAX_OFFSET_NS=4.0
WINDOW_END_MARGIN_NS=2.5
PLATEAU_OFFSET_NS=2.0
MAX_MATCH_CHI2_NDF=10.0
BACKGROUND_BINS=10
BACKGROUND_GAP_NS=1.0
SCAN_BACKGROUND=measured
ANCHOR_SMOOTHING_BINS=1.0
"""


def create_env_file_if_missing():
    """Create .env file with default values if it doesn't exist."""
    env_path = Path('.env')

    if not env_path.exists():
        print("📄 Creating default .env file...")
        env_path.write_text(DEFAULT_ENV)
        print("✅ .env file created with default values")
        print("💡 You can customize these settings in the .env file")
    else:
        print("✅ .env file already exists")
    return True


def create_directories():
    """Create required directories."""
    print("📁 Creating directories...")
    from config import config

    for directory in [config.DATA_DIR, config.LOG_DIR, 'output']:
        Path(directory).mkdir(parents=True, exist_ok=True)
        print(f"   ✅ {directory}")

    return True


def install_dependencies():
    """Check required dependencies."""
    print("📦 Checking dependencies...")

    missing_packages = []
    for package in REQUIRED_PACKAGES:
        try:
            __import__(package)
            print(f"   ✅ {package}")
        except ImportError:
            missing_packages.append(package)
            print(f"   ❌ {package}")

    if missing_packages:
        print(f"\n⚠️  Missing packages: {', '.join(missing_packages)}")
        print("Please install them using: pip install -r requirements.txt")
        return False

    return True


def initialize_database():
    """Create the run registry tables."""
    print("🗄️ Initializing run registry...")

    try:
        import database
        database.init_db()
        stats = database.get_database_statistics()
        if not stats['healthy']:
            print(f"   ❌ Missing tables: {', '.join(stats['missing_tables'])}")
            return False
        print(f"   ✅ Tables: {', '.join(f'{k} ({v})' for k, v in stats['stats'].items())}")
        return True

    except Exception as e:
        print(f"   ❌ Registry initialization failed: {e}")
        return False


def validate_system(duration_s: float = 0.5):
    """Simulate a short preset run and fit it."""
    print("🧪 Validating system...")

    try:
        from dataclasses import replace

        from analysis import FitWindow, fit_decay
        from config_loader import load_config
        from studies import simulate_folded

        experiment = replace(load_config('p32_quadrupole'), duration_s=duration_s)
        print(f"   ✅ Preset loaded: {experiment.transition.label}, tau = {experiment.transition.lifetime_ns} ns")

        hist = simulate_folded(experiment, workers=1)
        print(f"   ✅ Simulated {int(hist.total)} events")

        fit = fit_decay(hist, FitWindow(2.0, experiment.train.period_ns - 2.5))
        if not fit.converged:
            print(f"   ❌ Decay fit did not converge: {fit.diagnostic}")
            return False
        print(f"   ✅ Decay fit: tau = {fit.tau_ns:.3f} +/- {fit.tau_stat_ns:.3f} ns")
        return True

    except Exception as e:
        print(f"   ❌ System validation failed: {e}")
        return False


def display_setup_summary():
    """Display setup summary and next steps."""
    print("\n" + "=" * 60)
    print("🎉 ION LIFETIME TWIN SETUP COMPLETED!")
    print("=" * 60)

    from config import config

    print(f"\n📊 Configuration Summary:")
    print(f"   App Name: {config.APP_NAME}")
    print(f"   Version: {config.APP_VERSION}")
    print(f"   Registry: {config.DATABASE_PATH}")
    print(f"   Logs: {config.LOG_DIR}")
    print(f"   Workers: {config.DEFAULT_WORKERS}")

    print(f"\n🚀 Next Steps:")
    print("1. Simulate a run and measure the instrument response:")
    print("   python cli.py simulate p32_quadrupole --out-dir output/p32_quadrupole")
    print("\n2. Extract the lifetime:")
    print("   python cli.py fit output/p32_quadrupole/histogram.txt "
          "--irf output/p32_quadrupole/irf_histogram.txt --dark output/p32_quadrupole/dark_histogram.txt "
          "--label 'P3/2 quadrupole'")
    print("\n3. Summarize stored results:")
    print("   python cli.py report --out-dir output/report")

    print(f"\n💡 Tips:")
    print("- Customize settings in the .env file")
    print("- Preset configs live in presets/; copy one to start your own")


def main():
    """Main setup function."""
    print("🚀 ION LIFETIME TWIN SETUP")
    print("=" * 50)
    print()

    steps = [
        ("Creating .env configuration", create_env_file_if_missing),
        ("Creating directories", create_directories),
        ("Checking dependencies", install_dependencies),
        ("Initializing run registry", initialize_database),
        ("Validating system", validate_system)
    ]

    failed_steps = []

    for step_name, step_func in steps:
        print(f"\n{step_name}...")
        try:
            if not step_func():
                failed_steps.append(step_name)
                print(f"❌ {step_name} failed")
        except Exception as e:
            failed_steps.append(step_name)
            print(f"❌ {step_name} failed: {e}")

    if failed_steps:
        print(f"\n❌ Setup completed with errors:")
        for step in failed_steps:
            print(f"   - {step}")
        print("\nPlease review the errors above and run setup again if needed.")
        sys.exit(1)
    else:
        display_setup_summary()


if __name__ == "__main__":
    main()
