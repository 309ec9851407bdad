"""
Django settings for the anomaly-transfer project.

Tout ce qui paramètre une expérience vit ici : chemins des artefacts,
valeurs par défaut documentées des hyperparamètres, configuration du logging.
Les valeurs peuvent être surchargées par un fichier .env à la racine.
"""

from pathlib import Path
import os

from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent
load_dotenv(BASE_DIR / ".env")

TRANSFER_ARTIFACTS_DIR = Path(os.environ.get("TRANSFER_ARTIFACTS_DIR", BASE_DIR / "artifacts"))
TRANSFER_LOG_LEVEL = os.environ.get("TRANSFER_LOG_LEVEL", "INFO")
TRANSFER_DTYPE = os.environ.get("TRANSFER_DTYPE", "float64")
TRANSFER_JOBS = int(os.environ.get("TRANSFER_JOBS", "1"))

# Documented defaults of every experiment config key. A config file may set any
# subset of these; flags given on the command line win over the file.
TRANSFER_DEFAULTS = {
    "lambda": 0.5,
    "eta": -1.0,
    "beta": 1.0,
    "auto_calibrate": True,
    "normalize_weights": True,
    "w_adloss": 1.0,
    "lr": 0.01,
    "batch_size": 64,
    "pretrain_epochs": 20,
    "adversarial_epochs": 60,
    "seed": 0,
    "arch": "mlp",
    "leaky_slope": 0.2,
    "dropout": 0.5,
    "recalibrate_every": 0,
    "checkpoint_every": 0,
    "snapshot_every": 10,
    "eval_fraction": 0.5,
    "hist_bins": 30,
    "repeats": 5,
    "dtype": TRANSFER_DTYPE,
}

# Anomaly-rate grid of the digit experiments.
TRANSFER_RATE_GRID = (0.05, 0.15, 0.25, 0.35, 0.45)


# SECURITY WARNING: nothing here is served over HTTP, the key only satisfies Django.
SECRET_KEY = os.environ.get("DJANGO_SECRET_KEY", "anomaly-transfer-local-only")

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'transfer',
]

# No ORM models: experiment state lives in artifact files.
DATABASES = {}


LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "transfer": {
            "handlers": ["console"],
            "level": TRANSFER_LOG_LEVEL,
            "propagate": False,
        },
    },
}


# Internationalization

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True
