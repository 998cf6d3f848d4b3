from config_manager import config_field, config_template

from plasticity_control import constants


def _positive(value) -> bool:
    return value > 0


def _non_negative(value) -> bool:
    return value >= 0


def _positive_ints(values) -> bool:
    return len(values) > 0 and all(isinstance(v, int) and v > 0 for v in values)


class PlasticityConfigTemplate:

    _data_template = config_template.Template(
        fields=[
            config_field.Field(
                name=constants.DATASET,
                types=[str],
                requirements=[lambda x: x in constants.DATASETS],
            ),
            config_field.Field(name=constants.DATA_DIR, types=[str, type(None)]),
            config_field.Field(
                name=constants.NUM_TASKS, types=[int], requirements=[_positive]
            ),
            config_field.Field(
                name=constants.MAX_TASKS, types=[int], requirements=[_non_negative]
            ),
            config_field.Field(
                name=constants.CLASS_ORDER,
                types=[list],
                requirements=[lambda x: len(set(x)) == len(x)],
            ),
            config_field.Field(
                name=constants.SAMPLES_PER_CLASS,
                types=[int],
                requirements=[_non_negative],
            ),
            config_field.Field(
                name=constants.PAD_TO, types=[int], requirements=[_non_negative]
            ),
        ],
        level=[constants.DATA],
    )

    _model_template = config_template.Template(
        fields=[
            config_field.Field(
                name=constants.CONV_CHANNELS, types=[list], requirements=[_positive_ints]
            ),
            config_field.Field(
                name=constants.KERNEL_SIZE,
                types=[int],
                requirements=[lambda x: x > 0 and x % 2 == 1],
            ),
            config_field.Field(
                name=constants.DENSE_WIDTHS, types=[list], requirements=[_positive_ints]
            ),
            config_field.Field(
                name=constants.DROPOUT_RATE,
                types=[float, int],
                requirements=[lambda x: 0 <= x < 1],
            ),
            config_field.Field(
                name=constants.PRECISION,
                types=[str],
                requirements=[lambda x: x in [constants.FLOAT32, constants.FLOAT64]],
            ),
        ],
        level=[constants.MODEL],
    )

    _training_template = config_template.Template(
        fields=[
            config_field.Field(
                name=constants.STRATEGY,
                types=[str],
                requirements=[lambda x: x in constants.STRATEGIES],
            ),
            config_field.Field(name=constants.EPOCHS, types=[int], requirements=[_positive]),
            config_field.Field(
                name=constants.BATCH_SIZE, types=[int], requirements=[_positive]
            ),
            config_field.Field(
                name=constants.LEARNING_RATE,
                types=[float, int],
                requirements=[_non_negative],
            ),
            config_field.Field(
                name=constants.TOTAL_TRAIN_COUNT,
                types=[int],
                requirements=[_non_negative],
            ),
            config_field.Field(
                name=constants.IMPORTANCE_SAMPLES, types=[int], requirements=[_positive]
            ),
        ],
        level=[constants.TRAINING],
    )

    _npc_template = config_template.Template(
        fields=[
            config_field.Field(name=constants.ALPHA, types=[float, int], requirements=[_positive]),
            config_field.Field(name=constants.BETA, types=[float, int], requirements=[_positive]),
            config_field.Field(name=constants.ETA_MAX, types=[float, int], requirements=[_positive]),
            config_field.Field(
                name=constants.DELTA, types=[float], requirements=[lambda x: 0 < x < 1]
            ),
            config_field.Field(name=constants.SWAP_DELTA, types=[bool]),
        ],
        level=[constants.NPC_SECTION],
    )

    _penalty_template = config_template.Template(
        fields=[
            config_field.Field(
                name=constants.EWC_LAMBDA, types=[float, int], requirements=[_non_negative]
            ),
            config_field.Field(
                name=constants.MAS_LAMBDA, types=[float, int], requirements=[_non_negative]
            ),
            config_field.Field(
                name=constants.SI_LAMBDA, types=[float, int], requirements=[_non_negative]
            ),
            config_field.Field(
                name=constants.SI_DAMPING, types=[float, int], requirements=[_positive]
            ),
        ],
        level=[constants.PENALTY],
    )

    _analysis_template = config_template.Template(
        fields=[
            config_field.Field(
                name=constants.PROBE_SAMPLES, types=[int], requirements=[_positive]
            ),
        ],
        level=[constants.ANALYSIS],
    )

    _logging_template = config_template.Template(
        fields=[config_field.Field(name=constants.LOG_WALL_TIME, types=[bool])],
        level=[constants.LOGGING],
    )

    base_template = config_template.Template(
        fields=[
            config_field.Field(name=constants.SEED, types=[int], requirements=[_non_negative]),
            config_field.Field(name=constants.RUN_ID, types=[str]),
        ],
        nested_templates=[
            _data_template,
            _model_template,
            _training_template,
            _npc_template,
            _penalty_template,
            _analysis_template,
            _logging_template,
        ],
    )
