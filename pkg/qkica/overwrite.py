import logging
from pathlib import Path

from qkica import utils
from qkica.errors import ResultsExistError


class Overwrite:
    """
    Guards an output directory. A directory holding results is only reused
    when overwrite is set, and then only the files listed in its manifest
    are removed.
    """

    def __init__(self, outdir, overwrite=False):
        """
        Args:
        outdir: Directory the command writes into.
        overwrite: Value of 'output.overwrite' in the config.
        """
        self.outdir = Path(outdir)
        self.overwrite = overwrite
        self.cached_manifest = None

    def handle_overwrite(self):
        """
        Creates the output directory, or clears the previous run's outputs
        from it when overwrite is allowed.
        """
        if not self.check_results_exist():
            self.outdir.mkdir(parents=True, exist_ok=True)
            return
        if not self.overwrite:
            raise ResultsExistError(
                f" The output directory '{self.outdir}' already holds results and"
                " will not be written. Please set 'overwrite: true' in the output"
                " block of your config file or pass --overwrite.\n"
            )
        logging.debug(f" Results exist in {self.outdir}. Overwriting.\n")
        self._delete_results()

    def check_results_exist(self):
        if not self.outdir.is_dir():
            return False
        self.cached_manifest = utils.read_manifest(self.outdir)
        return self.cached_manifest is not None or any(self.outdir.iterdir())

    def _delete_results(self):
        """
        Removes the outputs recorded in the manifest and the manifest itself.
        Files the manifest does not list are left alone.
        """
        if self.cached_manifest is None:
            return
        for name in self.cached_manifest.get("outputs", []):
            target = self.outdir / Path(name).name
            if target.is_file():
                target.unlink()
        (self.outdir / utils.MANIFEST).unlink()
