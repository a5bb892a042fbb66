#pragma once

#include "curemark/csv.hpp"
#include "curemark/cure_model.hpp"
#include "curemark/data.hpp"
#include "curemark/errors.hpp"
#include "curemark/experiment.hpp"
#include "curemark/metrics.hpp"
#include "curemark/mixed_model.hpp"
#include "curemark/optim.hpp"
#include "curemark/prediction.hpp"
#include "curemark/rng.hpp"
#include "curemark/serialize.hpp"
#include "curemark/simulation.hpp"
