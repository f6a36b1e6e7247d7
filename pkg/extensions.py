from dataclasses import dataclass

from flask import current_app


@dataclass
class Services:
    config: object = None
    cluster: object = None
    harvester: object = None
    scheduler: object = None
    replica: object = None
    federation: object = None


class SuperIndex:
    """
    Registry of the long-lived objects a Flask app serves from. One app holds
    one Services bundle; blueprints reach it through the `superindex` proxy.
    """

    def init_app(self, app, **services) -> Services:
        bundle = Services(**services)
        app.extensions["superindex"] = bundle
        return bundle

    @property
    def services(self) -> Services:
        return current_app.extensions["superindex"]

    @property
    def config(self):
        return self.services.config

    @property
    def cluster(self):
        return self.services.cluster

    @property
    def harvester(self):
        return self.services.harvester

    @property
    def scheduler(self):
        return self.services.scheduler

    @property
    def replica(self):
        return self.services.replica

    @property
    def federation(self):
        return self.services.federation


superindex = SuperIndex()
