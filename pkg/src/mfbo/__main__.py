from mfbo.cli import entry

entry()
