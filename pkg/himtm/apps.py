from django.apps import AppConfig


class HimtmConfig(AppConfig):
    name = 'himtm'
    verbose_name = 'Hierarchical masked time-series modeling'
