import os
from pathlib import Path
from dotenv import load_dotenv

# Load environment variables
load_dotenv()

# Build paths inside the project
BASE_DIR = Path(__file__).resolve().parent.parent

# Security settings (no HTTP surface; Django needs a key regardless)
SECRET_KEY = os.getenv('SECRET_KEY', 'django-insecure-change-this-in-production')
DEBUG = os.getenv('DEBUG', 'False') == 'True'
ALLOWED_HOSTS = os.getenv('ALLOWED_HOSTS', 'localhost').split(',')

# Application definition
INSTALLED_APPS = [
    # Third party apps
    'rest_framework',

    # Local apps
    'himtm',
]

# No database: runs persist to files under HIMTM_RUNS_DIR
DATABASES = {}

# Internationalization
LANGUAGE_CODE = 'en-us'
TIME_ZONE = 'UTC'
USE_I18N = False
USE_TZ = True

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

# REST Framework settings (serializers validate run configuration files)
REST_FRAMEWORK = {
    'UNAUTHENTICATED_USER': None,
}

# Logging
HIMTM_LOG_LEVEL = os.getenv('HIMTM_LOG_LEVEL', 'INFO').upper()
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'standard': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'standard',
        },
    },
    'loggers': {
        'himtm': {
            'handlers': ['console'],
            'level': HIMTM_LOG_LEVEL,
            'propagate': False,
        },
    },
}

# Run configuration
HIMTM_RUNS_DIR = Path(os.getenv('HIMTM_RUNS_DIR', BASE_DIR / 'runs'))
HIMTM_GRADCHECK_TOLERANCE = float(os.getenv('HIMTM_GRADCHECK_TOLERANCE', 1e-4))
HIMTM_TASK_TIMEOUT = int(os.getenv('HIMTM_TASK_TIMEOUT', 3600))

# Celery Configuration
# Sweep and ablation jobs run in-process unless CELERY_TASK_ALWAYS_EAGER=False and workers are running
CELERY_BROKER_URL = os.getenv('CELERY_BROKER_URL', 'redis://localhost:6379/0')
CELERY_RESULT_BACKEND = os.getenv('CELERY_RESULT_BACKEND', 'redis://localhost:6379/0')
CELERY_TASK_ALWAYS_EAGER = os.getenv('CELERY_TASK_ALWAYS_EAGER', 'True') == 'True'
CELERY_TASK_EAGER_PROPAGATES = True
CELERY_ACCEPT_CONTENT = ['json']
CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_TIMEZONE = TIME_ZONE
