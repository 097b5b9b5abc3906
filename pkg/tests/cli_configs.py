"""Minimal configs that exercise every subcommand quickly."""

_DATA = "n_classes = 3\ntrain_per_class = 6\ntest_per_class = 2\nn_points = 32\nepochs = 1\n"

MINIMAL = {
    "gen-data": "n_classes = 3\ntrain_per_class = 4\ntest_per_class = 2\nn_points = 16\n",
    "simple-ensemble": _DATA + "n_instances = 3\nk_range = 1..3\n",
    "bagging": _DATA + "n_instances = 2\nfractions = 0.5, 1.0\n",
    "weight-search": _DATA + "families = pointnet_lite, deepsets_lite\nn_instances = 2\n",
    "random-factors": _DATA + "n_instances = 2\n",
    "head-ensemble": _DATA + "n_encoders = 2\nn_heads = 2\nhead_epochs = 1\n",
    "frustum": ("n_instances = 2\nn_train_scenes = 6\nn_test_scenes = 3\nn_object_points = 16\n"
                "n_clutter_points = 16\nepochs = 1\n"),
    "timing": "n_classes = 4\nn_points = 64\nbatch_size = 2\nrepetitions = 3\n",
}
