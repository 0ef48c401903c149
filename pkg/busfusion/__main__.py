# -*- coding: utf-8 -*-


def execute_busfusion_cli():  # pragma: no cover
    from busfusion.cli import cli

    return cli(prog_name="busfusion")


if __name__ == "__main__":  # pragma: no cover
    execute_busfusion_cli()
