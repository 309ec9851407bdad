from django.apps import AppConfig


class TransferConfig(AppConfig):
    name = 'transfer'
    verbose_name = "Importance-weighted anomaly transfer"
