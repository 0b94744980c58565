import argparse
import logging
from dnn_dsse.config import Config
from dnn_dsse.feeder import FeederParser
from dnn_dsse.loads import LoadModeler

"""
generate_meter_data.py

Writes a synthetic year of smart-meter readings for every metered load group of a feeder, in the delimited format
read by `LoadModeler.read_meter_file` (meter_id, transformer_group, interval_hours, energy_kwh).
"""


def main():
    parser = argparse.ArgumentParser(description="Synthesize a smart-meter year for a feeder file.")
    parser.add_argument("-f", "--feeder", required=True, help="Feeder JSON file")
    parser.add_argument("-o", "--output", required=True, help="CSV file to write")
    parser.add_argument("-s", "--seed", type=int, default=42, help="Master seed")
    parser.add_argument("--hours", type=int, default=8760, help="Length of the history in hours")
    parser.add_argument("--spread", type=float, default=0.25, help="Lognormal spread of single readings")
    parser.add_argument("-v", "--verbosity", default='INFO',
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'])
    args = parser.parse_args()
    Config.from_dict({}).setup_logging(args.verbosity)

    model = FeederParser.load(args.feeder)
    series = LoadModeler.synthesize_meter_year(model, args.seed, hours=args.hours, spread=args.spread)
    frame = LoadModeler.to_frame(series)
    frame.to_csv(args.output, index=False, float_format='%.6f')
    groups = frame['transformer_group'].nunique()
    logging.info(f"Wrote {len(frame)} readings of {len(series)} meters in {groups} groups to {args.output}")


if __name__ == "__main__":
    main()
