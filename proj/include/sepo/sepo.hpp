#pragma once

#include "sepo/core/error.hpp"
#include "sepo/core/hash.hpp"
#include "sepo/core/rng.hpp"

#include "sepo/autodiff/gradcheck.hpp"
#include "sepo/autodiff/ops.hpp"
#include "sepo/autodiff/optim.hpp"
#include "sepo/autodiff/tape.hpp"
#include "sepo/autodiff/tensor.hpp"

#include "sepo/lm/checkpoint.hpp"
#include "sepo/lm/model.hpp"
#include "sepo/lm/vocab.hpp"

#include "sepo/data/dataset_io.hpp"
#include "sepo/data/synthetic.hpp"

#include "sepo/objectives/losses.hpp"

#include "sepo/scoring/io.hpp"
#include "sepo/scoring/selection.hpp"

#include "sepo/pipeline/artifacts.hpp"
#include "sepo/pipeline/csv.hpp"
#include "sepo/pipeline/experiments.hpp"
#include "sepo/pipeline/stages.hpp"
