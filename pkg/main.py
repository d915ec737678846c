import logging
import sys

from cli.commands import build_parser, dispatch


def configure_logging(verbose: bool = False, debug: bool = False):
    level = logging.DEBUG if debug else logging.INFO if verbose else logging.WARNING
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')


def main():
    """Entry point of the flowrecall command line."""
    args = build_parser().parse_args()
    configure_logging(args.verbose, args.debug)
    sys.exit(dispatch(args))


if __name__ == '__main__':
    main()
