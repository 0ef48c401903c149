# -*- coding: utf-8 -*-
from busfusion.cli import cli  # pragma: no cover


def console():  # pragma: no cover
    cli(prog_name="busfusion")
