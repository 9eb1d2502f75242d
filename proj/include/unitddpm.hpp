#pragma once

#include "unitddpm/adam.hpp"
#include "unitddpm/checkpoint.hpp"
#include "unitddpm/commands.hpp"
#include "unitddpm/config.hpp"
#include "unitddpm/data_io.hpp"
#include "unitddpm/errors.hpp"
#include "unitddpm/evaluation.hpp"
#include "unitddpm/module.hpp"
#include "unitddpm/networks.hpp"
#include "unitddpm/ops.hpp"
#include "unitddpm/rng.hpp"
#include "unitddpm/sampler.hpp"
#include "unitddpm/schedule.hpp"
#include "unitddpm/tensor.hpp"
#include "unitddpm/training.hpp"
